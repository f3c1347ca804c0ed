//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! Enough for message passing on packed molecular graphs: matrix products,
//! broadcasting adds/multiplies, segment reductions and softmax, row
//! reductions, activations, a GRU cell and a Gaussian NLL head.

mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled};
pub use tape::{nll_value, sigmoid, softplus, Activation, Gradients, Reduce, Tape, Var, LEAKY_RELU_SLOPE};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variance must be positive")]
    NonPositiveVariance,
}

/// Parameters of a GRU cell with input width `d_in` and state width `d`.
///
/// `w` is `d_in x 3d` (update, reset, candidate blocks), `u_zr` is `d x 2d`,
/// `u_h` is `d x d`, `b` has length `3d`.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w: Var,
    pub u_zr: Var,
    pub u_h: Var,
    pub b: Var,
}

/// One GRU step:
/// `z = sig(x Wz + h Uz + bz)`, `r = sig(x Wr + h Ur + br)`,
/// `c = tanh(x Wh + (r * h) Uh + bh)`, `h' = (1 - z) * h + z * c`.
pub fn gru_cell(tape: &mut Tape, state: Var, input: Var, p: &GruVars) -> Result<Var, DiffError> {
    let d = tape.value(state).cols();
    let xw = tape.matmul(input, p.w)?;
    let xw = tape.add_row(xw, p.b)?;
    let hu = tape.matmul(state, p.u_zr)?;
    let xz = tape.slice_cols(xw, 0, d)?;
    let xr = tape.slice_cols(xw, d, 2 * d)?;
    let xh = tape.slice_cols(xw, 2 * d, 3 * d)?;
    let hz = tape.slice_cols(hu, 0, d)?;
    let hr = tape.slice_cols(hu, d, 2 * d)?;
    let z = tape.add(xz, hz)?;
    let z = tape.activation(z, Activation::Sigmoid)?;
    let r = tape.add(xr, hr)?;
    let r = tape.activation(r, Activation::Sigmoid)?;
    let rh = tape.mul(r, state)?;
    let rhu = tape.matmul(rh, p.u_h)?;
    let cand = tape.add(xh, rhu)?;
    let cand = tape.activation(cand, Activation::Tanh)?;
    let delta = tape.sub(cand, state)?;
    let step = tape.mul(z, delta)?;
    tape.add(state, step)
}
