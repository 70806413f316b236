//! Dense tensors, a recording tape for reverse-mode differentiation, and Adam.

pub mod adam;
pub mod container;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The single generator type used for every random draw.
pub type Rng = ChaCha8Rng;

/// Independent stream of the project generator for a given purpose tag.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
