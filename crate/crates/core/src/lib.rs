//! Attribute-aware adversarial attacks on image retrieval models.
//!
//! The pipeline has two stages over a frozen joint vision-language space:
//! first, per-attribute inversion networks learn to map an image feature
//! to pseudo-tokens that slot into a fixed prompt template; second, an
//! epsilon-bounded perturbation generator is trained to push both the
//! surrogate feature and every attribute's pseudo-token toward the least
//! similar other identity. Retrieval metrics, input-transformation
//! defenses, pseudo-token interpretation and a synthetic labelled dataset
//! round out the toolkit.
//!
//! All numerics are generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); [`Real`] is the recommended working precision and
//! the concrete aliases below fix it.

pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod defenses;
pub mod encoders;
pub mod error;
pub mod imageio;
pub mod interpret;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod prompt;
pub mod scalar;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Recommended working precision.
pub type Real = f64;

pub type RealTensor = tensor::Tensor<Real>;
pub type RealTape = autodiff::Tape<Real>;
pub type RealVisualEncoder = encoders::VisualEncoder<Real>;
pub type RealTextEncoder = encoders::TextEncoder<Real>;
pub type RealInversionNetworks = inversion::InversionNetworks<Real>;
pub type RealPseudoTokenSet = inversion::PseudoTokenSet<Real>;
pub type RealPerturbationGenerator = attack::PerturbationGenerator<Real>;
pub type RealHandcraftedExtractor = synthdata::HandcraftedExtractor<Real>;
pub type RealSyntheticDataset = synthdata::SyntheticDataset<Real>;
pub type RealCheckpoint = checkpoint::Checkpoint<Real>;
