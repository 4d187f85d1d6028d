//! Dense matrices, seeded randomness, reverse-mode gradients and finite-difference checks.

mod gradcheck;
mod matrix;
mod rng;
mod tape;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, single, tape_objective, GradCheckReport};
pub use matrix::{pack_upper, sigmoid, softplus, unpack_upper, upper_len, Matrix};
pub use rng::{gaussian_matrix, RngState, SeededRng};
pub use tape::{gaussian_kl_sym_value, moments, smoothed_kl_sym, Gradients, Tape, Var};

pub(crate) use tape::bce_value;

/// Named parameter matrices, ordered by name.
pub type ParamMap = BTreeMap<String, Matrix>;

/// Runs `build` on a fresh tape and returns the value of the node it produces.
pub fn evaluate(build: impl FnOnce(&mut Tape) -> crate::Result<Var>) -> crate::Result<Matrix> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).clone())
}
