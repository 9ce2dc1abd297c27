//! Minimal dense linear algebra and deterministic random number generation.
//!
//! Tensors are immutable-after-construction row-major buffers of `f32` or
//! `f64`. Every reduction runs in a fixed order (ascending inner index), so
//! results are independent of thread count and identical across runs.

mod io;
mod qr;
mod rng;
mod tensor;

pub use io::{decode_tensor, encode_tensor, encoded_len};
pub use qr::qr_orthonormalize;
pub use rng::{gaussian, RngStream};
pub use tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

use serde::{Deserialize, Serialize};

/// Floating-point width of a run. Identities and oracle checks use `F64`;
/// training runs default to `F32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}
