//! Numeric substrate: tensors, the differentiation tape, optimizer, schedule,
//! PCA and seeded randomness.

pub mod graph;
pub mod init;
pub mod optim;
pub mod params;
pub mod pca;
pub mod rng;
pub mod tensor;

pub use graph::{AttnSpan, Graph, OpKind, Segment, Var};
pub use optim::{adam_step, AdamState, DecayMode, LrSchedule};
pub use params::{Gradients, ParamId, ParamStore};
pub use pca::{pca_2d, pca_fit, PcaFit};
pub use rng::Rng;
pub use tensor::Tensor;
