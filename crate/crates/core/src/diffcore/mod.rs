//! Minimal reverse-mode differentiation engine: tensors, a static graph of
//! primitive ops, Adam, checkpoints and a finite-difference checker.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
#[allow(unused_imports)]
pub(crate) use checkpoint::Reader;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, ParamCheck};
pub use graph::{sigmoid, softplus, Feed, Gradients, Graph, NodeId, Op, ParamEntry};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};

/// Seeded generator used for all parameter init and sampling.
pub fn rng_from_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
