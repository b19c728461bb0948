//! Pure numeric kernels shared by the tape ops.
//!
//! Every function here is a plain `Tensor -> Tensor` computation with no
//! graph bookkeeping, so each forward/backward pair can be tested in
//! isolation before it is wired into autograd.

pub mod conv;
pub mod norm;
pub mod pad;
pub mod pool;
