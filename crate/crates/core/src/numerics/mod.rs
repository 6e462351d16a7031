//! Dense tensor substrate: shaped arrays, stable reductions, seeded RNG.

mod ops;
mod rng;
mod scalar;
mod tensor;

pub use ops::{axpy, dot, matmul, matmul_nt, softmax_in_place, sq_dist, stable_logsumexp, stable_softmax};
pub use rng::{derive_seed, Rng};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape4, Tensor4};
